//! Raw numeric kernels shared by the graph ops, plus loop-form oracles.

use crate::gemm::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one `[C, H, W]` image into `[C*kh*kw, oh*ow]` patches.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let out = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back into `[C, H, W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation. `x: [B, C, H, W]`, `w: [O, C, kh, kw]`.
pub(crate) fn conv2d_forward(x: &[f64], b: usize, w: &[f64], o: usize, g: &ConvGeom) -> Vec<f64> {
    let in_per = g.c * g.h * g.w;
    let out_per = o * g.col_cols();
    let mut out = vec![0.0; b * out_per];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    for bi in 0..b {
        let xb = &x[bi * in_per..(bi + 1) * in_per];
        let ob = &mut out[bi * out_per..(bi + 1) * out_per];
        if g.is_pointwise() {
            gemm(o, g.c, g.col_cols(), w, false, xb, false, ob, 0.0);
        } else {
            im2col(xb, g, &mut cols);
            gemm(o, g.col_rows(), g.col_cols(), w, false, &cols, false, ob, 0.0);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    b: usize,
    w: &[f64],
    o: usize,
    g: &ConvGeom,
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_per = g.c * g.h * g.w;
    let out_per = o * g.col_cols();
    let mut dx = want_dx.then(|| vec![0.0; b * in_per]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for bi in 0..b {
        let dyb = &dy[bi * out_per..(bi + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[bi * in_per..(bi + 1) * in_per];
            if g.is_pointwise() {
                gemm(o, g.col_cols(), g.c, dyb, false, xb, true, dw, 1.0);
            } else {
                im2col(xb, g, &mut cols);
                gemm(o, g.col_cols(), g.col_rows(), dyb, false, &cols, true, dw, 1.0);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * in_per..(bi + 1) * in_per];
            if g.is_pointwise() {
                gemm(g.c, o, g.col_cols(), w, true, dyb, false, dxb, 0.0);
            } else {
                gemm(g.col_rows(), o, g.col_cols(), w, true, dyb, false, &mut cols, 0.0);
                col2im(&cols, g, dxb);
            }
        }
    }
    (dx, dw)
}

/// Triple-loop matrix product of `[m, k]` and `[k, n]` tensors.
pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    assert_eq!(k, b.dim(0));
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv2d_naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    assert_eq!(c, w.dim(1));
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize] * w.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, o, oh, ow], out).unwrap()
}
