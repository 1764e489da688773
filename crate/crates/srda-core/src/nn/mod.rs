//! A small, deterministic, CPU-only neural-network engine.
//!
//! Layers carry explicit forward caches and hand-written backward passes;
//! there is no tape. Everything runs in f64 on a single thread, so identical
//! inputs produce bit-identical results in a fixed environment.

mod conv;
mod optim;
mod unet;

pub use conv::{Conv2d, ConvCtx};
pub use optim::{Adam, AdamState, SgdMomentum};
pub use unet::UNet;

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Slope of the leaky rectifier used throughout.
pub const LEAKY_SLOPE: f64 = 0.1;

/// One learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything whose parameters an optimizer can visit in a stable order.
pub trait ParamModel {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub fn leaky_relu(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
}

/// Backward through the rectifier given its *output* (sign of output equals
/// sign of input for a positive slope).
pub fn leaky_relu_backward(dy: &mut Array4<f64>, y: &Array4<f64>) {
    dy.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    });
}

/// 2x2 max pooling; remembers per-window argmax for the backward scatter.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Vec<u32>) {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<f64>::zeros((b, c, ho, wo));
    let mut idx = vec![0u32; b * c * ho * wo];
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let src = &xs[bc * h * w..(bc + 1) * h * w];
        let dst = &mut ys[bc * ho * wo..(bc + 1) * ho * wo];
        let ids = &mut idx[bc * ho * wo..(bc + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * w + 2 * ox;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                let mut best_v = src[cand[0]];
                for &cpos in &cand[1..] {
                    if src[cpos] > best_v {
                        best_v = src[cpos];
                        best = cpos;
                    }
                }
                dst[oy * wo + ox] = best_v;
                ids[oy * wo + ox] = best as u32;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(
    dy: &Array4<f64>,
    idx: &[u32],
    in_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (b, c, h, w) = in_dim;
    let (_, _, ho, wo) = dy.dim();
    let mut dx = Array4::<f64>::zeros(in_dim);
    let ds = dy.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let grad = &ds[bc * ho * wo..(bc + 1) * ho * wo];
        let ids = &idx[bc * ho * wo..(bc + 1) * ho * wo];
        let dst = &mut xs[bc * h * w..(bc + 1) * h * w];
        for (g, &i) in grad.iter().zip(ids.iter()) {
            dst[i as usize] += g;
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let src = &xs[bc * h * w..(bc + 1) * h * w];
        let dst = &mut ys[bc * 4 * h * w..(bc + 1) * 4 * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let v = src[yy * w + xx];
                let base = 2 * yy * 2 * w + 2 * xx;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let ds = dy.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let src = &ds[bc * h2 * w2..(bc + 1) * h2 * w2];
        let dst = &mut xs[bc * h * w..(bc + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let base = 2 * yy * w2 + 2 * xx;
                dst[yy * w + xx] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    dx
}

/// Global average pooling `(B,C,H,W) -> (B,C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut y = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut sum = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    sum += x[[bi, ci, yy, xx]];
                }
            }
            y[[bi, ci]] = sum / n;
        }
    }
    y
}

pub fn global_avg_pool_backward(
    dy: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (b, c, h, w) = in_dim;
    let n = (h * w) as f64;
    let mut dx = Array4::<f64>::zeros(in_dim);
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[[bi, ci]] / n;
            for yy in 0..h {
                for xx in 0..w {
                    dx[[bi, ci, yy, xx]] = g;
                }
            }
        }
    }
    dx
}

/// Fully connected layer, `(B, in) -> (B, out)`.
pub struct Linear {
    pub weight: Param, // (out, in)
    pub bias: Param,   // (out)
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng)).into_dyn();
        let bias = Array1::<f64>::zeros(fan_out).into_dyn();
        Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(self.bias.value.iter()) {
                *v += b;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        {
            let mut g = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            g += &dy.t().dot(x);
        }
        for co in 0..self.fan_out {
            self.bias.grad[co] += dy.column(co).sum();
        }
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        dy.dot(&w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_roundtrip_gradient() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| (y * 4 + x) as f64);
        let (y, idx) = maxpool2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0);
        let dx = maxpool2_backward(&dy, &idx, (1, 1, 4, 4));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, y, x)| (y * 2 + x) as f64 + 1.0);
        let y = upsample2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        assert_eq!(y[[0, 0, 1, 1]], 1.0);
        assert_eq!(y[[0, 0, 3, 3]], 4.0);
        let dx = upsample2_backward(&y);
        assert_eq!(dx[[0, 0, 0, 0]], 4.0);
        assert_eq!(dx[[0, 0, 1, 1]], 16.0);
    }

    #[test]
    fn gap_mean_and_gradient() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| (c * 4 + y * 2 + x) as f64);
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 1.5);
        assert_eq!(y[[0, 1]], 5.5);
        let dy = Array2::from_elem((1, 2), 1.0);
        let dx = global_avg_pool_backward(&dy, (1, 2, 2, 2));
        assert!((dx[[0, 0, 0, 0]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lin = Linear::new(3, 2, &mut rng);
        let x = Array2::from_shape_fn((2, 3), |(i, j)| ((i + 2 * j) as f64 * 0.31).sin());
        let w_obj = Array2::from_shape_fn((2, 2), |(i, j)| 0.5 + (i + j) as f64 * 0.25);
        let objective =
            |lin: &Linear, x: &Array2<f64>| -> f64 { (&lin.forward(x) * &w_obj).sum() };
        let dx = lin.backward(&w_obj, &x);
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let up = objective(&lin, &xp);
            xp.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let down = objective(&lin, &xp);
            let num = (up - down) / (2.0 * eps);
            assert!((num - dx.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
        for idx in 0..lin.weight.value.len() {
            let orig = lin.weight.value.as_slice_mut().unwrap()[idx];
            lin.weight.value.as_slice_mut().unwrap()[idx] = orig + eps;
            let up = objective(&lin, &x);
            lin.weight.value.as_slice_mut().unwrap()[idx] = orig - eps;
            let down = objective(&lin, &x);
            lin.weight.value.as_slice_mut().unwrap()[idx] = orig;
            let num = (up - down) / (2.0 * eps);
            assert!((num - lin.weight.grad.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn leaky_relu_backward_uses_output_sign() {
        let mut x = Array4::from_shape_fn((1, 1, 1, 4), |(_, _, _, i)| i as f64 - 2.0);
        leaky_relu(&mut x);
        assert_eq!(x[[0, 0, 0, 0]], -0.2);
        assert_eq!(x[[0, 0, 0, 3]], 1.0);
        let mut dy = Array4::from_elem((1, 1, 1, 4), 1.0);
        leaky_relu_backward(&mut dy, &x);
        assert_eq!(dy[[0, 0, 0, 0]], LEAKY_SLOPE);
        assert_eq!(dy[[0, 0, 0, 3]], 1.0);
    }
}
