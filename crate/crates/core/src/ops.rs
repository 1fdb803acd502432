//! Dense kernels over row-major `(tokens x channels)` matrices.
//!
//! The tape and the injection code both call these, so a map recomputed from
//! stored queries and keys is bit-identical to the one the live forward pass
//! produced.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::tensor::Real;

pub fn matmul<F: Real>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    a.dot(b)
}

/// `a * b^T`.
pub fn matmul_bt<F: Real>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    a.dot(&b.t())
}

pub fn scale<F: Real>(a: &ArrayView2<F>, s: F) -> Array2<F> {
    a.mapv(|v| v * s)
}

pub fn softmax_rows<F: Real>(x: &ArrayView2<F>) -> Array2<F> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
    out
}

/// Scaled dot-product attention map `softmax(q k^T * scale)`.
pub fn attention_map<F: Real>(q: &ArrayView2<F>, k: &ArrayView2<F>, scale_by: F) -> Array2<F> {
    softmax_rows(&scale(&matmul_bt(q, k).view(), scale_by).view())
}

pub fn silu<F: Real>(x: &ArrayView2<F>) -> Array2<F> {
    x.mapv(|v| v / (F::one() + (-v).exp()))
}

pub fn silu_grad<F: Real>(x: F) -> F {
    let sig = F::one() / (F::one() + (-x).exp());
    sig * (F::one() + x * (F::one() - sig))
}

/// Per-row standardization; returns the output and each row's `1/std`.
pub fn normalize_rows<F: Real>(x: &ArrayView2<F>, eps: F) -> (Array2<F>, Vec<F>) {
    let n = F::from_usize(x.ncols()).expect("usize");
    let mut out = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.iter().copied().sum::<F>() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// 3x3, zero-padded patch extraction. Output column `(ky*3 + kx)*c + ch`.
pub fn im2col3<F: Real>(x: &ArrayView2<F>, h: usize, w: usize) -> Array2<F> {
    let c = x.ncols();
    debug_assert_eq!(x.nrows(), h * w);
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("contiguous");
    let mut out = Array2::<F>::zeros((h * w, 9 * c));
    let dst = out.as_slice_mut().expect("contiguous");
    for y in 0..h {
        for xx in 0..w {
            let row = (y * w + xx) * 9 * c;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let s0 = (sy as usize * w + sx as usize) * c;
                    let d0 = row + (ky * 3 + kx) * c;
                    dst[d0..d0 + c].copy_from_slice(&src[s0..s0 + c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col3`].
pub fn col2im3<F: Real>(cols: &ArrayView2<F>, h: usize, w: usize) -> Array2<F> {
    let c = cols.ncols() / 9;
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("contiguous");
    let mut out = Array2::<F>::zeros((h * w, c));
    let dst = out.as_slice_mut().expect("contiguous");
    for y in 0..h {
        for xx in 0..w {
            let row = (y * w + xx) * 9 * c;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let d0 = (sy as usize * w + sx as usize) * c;
                    let s0 = row + (ky * 3 + kx) * c;
                    for i in 0..c {
                        dst[d0 + i] += src[s0 + i];
                    }
                }
            }
        }
    }
    out
}

/// 2x2 mean pooling of an `h x w` token grid.
pub fn avg_pool2<F: Real>(x: &ArrayView2<F>, h: usize, w: usize) -> Array2<F> {
    let (ho, wo, c) = (h / 2, w / 2, x.ncols());
    let quarter = F::from_f64c(0.25);
    let mut out = Array2::<F>::zeros((ho * wo, c));
    for y in 0..ho {
        for xx in 0..wo {
            let mut row = out.row_mut(y * wo + xx);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                row += &x.row((2 * y + dy) * w + 2 * xx + dx);
            }
            row.mapv_inplace(|v| v * quarter);
        }
    }
    out
}

pub fn avg_pool2_backward<F: Real>(g: &ArrayView2<F>, h: usize, w: usize) -> Array2<F> {
    let wo = w / 2;
    let quarter = F::from_f64c(0.25);
    let mut out = Array2::<F>::zeros((h * w, g.ncols()));
    for y in 0..h {
        for xx in 0..w {
            let src = g.row((y / 2) * wo + xx / 2);
            out.row_mut(y * w + xx).assign(&src.mapv(|v| v * quarter));
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of an `h x w` token grid.
pub fn upsample2<F: Real>(x: &ArrayView2<F>, h: usize, w: usize) -> Array2<F> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Array2::<F>::zeros((ho * wo, x.ncols()));
    for y in 0..ho {
        for xx in 0..wo {
            out.row_mut(y * wo + xx).assign(&x.row((y / 2) * w + xx / 2));
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(g: &ArrayView2<F>, h: usize, w: usize) -> Array2<F> {
    let wo = 2 * w;
    let mut out = Array2::<F>::zeros((h * w, g.ncols()));
    for y in 0..2 * h {
        for xx in 0..wo {
            let mut dst = out.row_mut((y / 2) * w + xx / 2);
            dst += &g.row(y * wo + xx);
        }
    }
    out
}

pub fn concat_cols<F: Real>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

pub fn slice_cols<F: Real>(a: &ArrayView2<F>, start: usize, len: usize) -> Array2<F> {
    a.slice(s![.., start..start + len]).to_owned()
}
