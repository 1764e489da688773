//! 2D convolution via im2col and matrix multiplication.

use ndarray::{Array1, Array2, Array4, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Param;

/// Lowered input patches: shape `(cin*k*k, batch*ho*wo)`.
fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let ncols = b * ho * wo;
    let mut col = Array2::<f64>::zeros((c * k * k, ncols));
    let xs = x.as_slice().expect("input is standard layout");
    let cs = col.as_slice_mut().expect("col is standard layout");

    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out_row = &mut cs[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let x_base = (bi * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_base = x_base + iy as usize * w;
                        let dst_base = (bi * ho + oy) * wo;
                        if stride == 1 {
                            // Valid ox range: 0 <= ox + kx - pad < w.
                            let lo = pad.saturating_sub(kx);
                            let hi = (w + pad - kx).min(wo);
                            if lo < hi {
                                let src_lo = lo + kx - pad;
                                out_row[dst_base + lo..dst_base + hi].copy_from_slice(
                                    &xs[src_base + src_lo..src_base + src_lo + (hi - lo)],
                                );
                            }
                        } else {
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    out_row[dst_base + ox] = xs[src_base + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add inverse of [`im2col`].
fn col2im(
    dcol: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = in_dim;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let ncols = b * ho * wo;
    let mut dx = Array4::<f64>::zeros(in_dim);
    let ds = dcol.as_slice().expect("dcol is standard layout");
    let xs = dx.as_slice_mut().expect("dx is standard layout");

    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let in_row = &ds[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let x_base = (bi * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_base = x_base + iy as usize * w;
                        let src_base = (bi * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[dst_base + ix as usize] += in_row[src_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Cached forward state needed by the backward pass.
pub struct ConvCtx {
    col: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialization over `fan_in = cin * k *k`.
    pub fn new(
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * ksize * ksize) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight =
            Array2::from_shape_fn((cout, cin * ksize * ksize), |_| normal.sample(rng)).into_dyn();
        let bias = Array1::<f64>::zeros(cout).into_dyn();
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cin,
            cout,
            ksize,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.ksize) / self.stride + 1,
            (w + 2 * self.pad - self.ksize) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCtx) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "channel mismatch in conv forward");
        let (ho, wo) = self.out_hw(h, w);
        let col = im2col(x, self.ksize, self.stride, self.pad);
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let y2 = w2.dot(&col); // (cout, b*ho*wo)

        let mut y = Array4::<f64>::zeros((b, self.cout, ho, wo));
        let ys = y.as_slice_mut().unwrap();
        let y2s = y2.as_slice().unwrap();
        let plane = ho * wo;
        let ncols = b * plane;
        for co in 0..self.cout {
            let bias = self.bias.value[co];
            let src = &y2s[co * ncols..(co + 1) * ncols];
            for bi in 0..b {
                let dst = &mut ys[(bi * self.cout + co) * plane..][..plane];
                let s = &src[bi * plane..(bi + 1) * plane];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d = v + bias;
                }
            }
        }
        (
            y,
            ConvCtx {
                col,
                in_dim: (b, c, h, w),
            },
        )
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<f64>, ctx: &ConvCtx) -> Array4<f64> {
        let (b, co_n, ho, wo) = dy.dim();
        assert_eq!(co_n, self.cout);
        let plane = ho * wo;
        let ncols = b * plane;

        // Repack (b, cout, ho, wo) -> (cout, b*ho*wo).
        let mut dy2 = Array2::<f64>::zeros((self.cout, ncols));
        {
            let ds = dy.as_slice().unwrap();
            let d2 = dy2.as_slice_mut().unwrap();
            for co in 0..self.cout {
                for bi in 0..b {
                    let src = &ds[(bi * self.cout + co) * plane..][..plane];
                    d2[co * ncols + bi * plane..co * ncols + (bi + 1) * plane]
                        .copy_from_slice(src);
                }
            }
        }

        let dw = dy2.dot(&ctx.col.t());
        {
            let mut g = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap();
            g += &dw;
        }
        for co in 0..self.cout {
            self.bias.grad[co] += dy2.row(co).sum();
        }

        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dcol = w2.t().dot(&dy2);
        col2im(&dcol, ctx.in_dim, self.ksize, self.stride, self.pad)
    }
}
