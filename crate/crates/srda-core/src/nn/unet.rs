//! U-shaped encoder-decoder with additive skip connections.
//!
//! Encoder: one 3x3 conv + leaky ReLU per level, 2x2 max pooling between
//! levels, channel width doubling from `base_width`. Decoder: nearest 2x
//! upsampling, 1x1 projection onto the skip width, additive skip merge,
//! then a 3x3 conv + leaky ReLU. A 1x1 head maps to class logits.
//!
//! There are no stochastic layers (no dropout, no batch statistics), so a
//! forward pass is the same in training and evaluation.

use ndarray::Array4;
use rand::Rng;

use super::conv::{Conv2d, ConvCtx};
use super::{
    leaky_relu, leaky_relu_backward, maxpool2, maxpool2_backward, upsample2, upsample2_backward,
    Param, ParamModel,
};

pub struct UNet {
    pub in_channels: usize,
    pub classes: usize,
    pub levels: usize,
    pub base_width: usize,
    enc: Vec<Conv2d>,
    dec_proj: Vec<Conv2d>,
    dec_conv: Vec<Conv2d>,
    head: Conv2d,
}

pub struct UNetCtx {
    enc_ctx: Vec<ConvCtx>,
    enc_act: Vec<Array4<f64>>,
    pool_idx: Vec<Vec<u32>>,
    pool_in_dims: Vec<(usize, usize, usize, usize)>,
    dec_proj_ctx: Vec<Option<ConvCtx>>,
    dec_conv_ctx: Vec<Option<ConvCtx>>,
    dec_act: Vec<Option<Array4<f64>>>,
    head_ctx: ConvCtx,
}

impl UNet {
    pub fn new(
        in_channels: usize,
        classes: usize,
        levels: usize,
        base_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(classes >= 2 && levels >= 2 && base_width >= 1);
        let width = |l: usize| base_width << l;
        let mut enc = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { in_channels } else { width(l - 1) };
            enc.push(Conv2d::new(cin, width(l), 3, 1, 1, rng));
        }
        let mut dec_proj = Vec::with_capacity(levels - 1);
        let mut dec_conv = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            dec_proj.push(Conv2d::new(width(l + 1), width(l), 1, 1, 0, rng));
            dec_conv.push(Conv2d::new(width(l), width(l), 3, 1, 1, rng));
        }
        let head = Conv2d::new(base_width, classes, 1, 1, 0, rng);
        UNet {
            in_channels,
            classes,
            levels,
            base_width,
            enc,
            dec_proj,
            dec_conv,
            head,
        }
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, UNetCtx) {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels);
        let div = self.spatial_divisor();
        assert!(
            h % div == 0 && w % div == 0,
            "input {h}x{w} not divisible by {div}"
        );

        let mut enc_ctx = Vec::with_capacity(self.levels);
        let mut enc_act: Vec<Array4<f64>> = Vec::with_capacity(self.levels);
        let mut pool_idx = Vec::with_capacity(self.levels - 1);
        let mut pool_in_dims = Vec::with_capacity(self.levels - 1);

        let (mut act, ctx) = self.enc[0].forward(x);
        leaky_relu(&mut act);
        enc_ctx.push(ctx);
        enc_act.push(act);
        for l in 1..self.levels {
            let (pooled, idx) = maxpool2(&enc_act[l - 1]);
            pool_in_dims.push(enc_act[l - 1].dim());
            pool_idx.push(idx);
            let (mut act, ctx) = self.enc[l].forward(&pooled);
            leaky_relu(&mut act);
            enc_ctx.push(ctx);
            enc_act.push(act);
        }

        let mut dec_proj_ctx: Vec<Option<ConvCtx>> = (0..self.levels - 1).map(|_| None).collect();
        let mut dec_conv_ctx: Vec<Option<ConvCtx>> = (0..self.levels - 1).map(|_| None).collect();
        let mut dec_act: Vec<Option<Array4<f64>>> = (0..self.levels - 1).map(|_| None).collect();

        let mut deep = enc_act[self.levels - 1].clone();
        for l in (0..self.levels - 1).rev() {
            let up = upsample2(&deep);
            let (mut sum, pctx) = self.dec_proj[l].forward(&up);
            sum += &enc_act[l];
            let (mut act, cctx) = self.dec_conv[l].forward(&sum);
            leaky_relu(&mut act);
            dec_proj_ctx[l] = Some(pctx);
            dec_conv_ctx[l] = Some(cctx);
            deep = act.clone();
            dec_act[l] = Some(act);
        }

        let (logits, head_ctx) = self.head.forward(&deep);
        (
            logits,
            UNetCtx {
                enc_ctx,
                enc_act,
                pool_idx,
                pool_in_dims,
                dec_proj_ctx,
                dec_conv_ctx,
                dec_act,
                head_ctx,
            },
        )
    }

    /// Inference convenience; caches are built and discarded.
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_train(x).0
    }

    /// Accumulates parameter gradients from `dlogits`; returns the gradient
    /// with respect to the input.
    pub fn backward(&mut self, dlogits: &Array4<f64>, ctx: &UNetCtx) -> Array4<f64> {
        let mut d = self.head.backward(dlogits, &ctx.head_ctx);

        let mut d_enc: Vec<Option<Array4<f64>>> = (0..self.levels).map(|_| None).collect();
        for l in 0..self.levels - 1 {
            // d is the gradient w.r.t. dec_act[l].
            leaky_relu_backward(&mut d, ctx.dec_act[l].as_ref().unwrap());
            let dsum = self
                .dec_conv[l]
                .backward(&d, ctx.dec_conv_ctx[l].as_ref().unwrap());
            let dup = self
                .dec_proj[l]
                .backward(&dsum, ctx.dec_proj_ctx[l].as_ref().unwrap());
            d_enc[l] = Some(dsum); // skip branch
            d = upsample2_backward(&dup);
        }
        d_enc[self.levels - 1] = Some(d);

        let mut dinput = None;
        for l in (0..self.levels).rev() {
            let mut da = d_enc[l].take().unwrap();
            leaky_relu_backward(&mut da, &ctx.enc_act[l]);
            let dconv_in = self.enc[l].backward(&da, &ctx.enc_ctx[l]);
            if l > 0 {
                let dprev = maxpool2_backward(&dconv_in, &ctx.pool_idx[l - 1], ctx.pool_in_dims[l - 1]);
                *d_enc[l - 1].as_mut().unwrap() += &dprev;
            } else {
                dinput = Some(dconv_in);
            }
        }
        dinput.unwrap()
    }
}

impl ParamModel for UNet {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for c in &self.enc {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for l in 0..self.levels - 1 {
            out.push(&self.dec_proj[l].weight);
            out.push(&self.dec_proj[l].bias);
            out.push(&self.dec_conv[l].weight);
            out.push(&self.dec_conv[l].bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for c in &mut self.enc {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for (p, c) in self.dec_proj.iter_mut().zip(self.dec_conv.iter_mut()) {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_unet(seed: u64) -> UNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UNet::new(1, 2, 3, 2, &mut rng)
    }

    #[test]
    fn forward_shape_contract() {
        let net = tiny_unet(0);
        let x = Array4::<f64>::zeros((2, 1, 8, 8));
        let y = net.forward(&x);
        assert_eq!(y.dim(), (2, 2, 8, 8));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_params() {
        let a = tiny_unet(5);
        let b = tiny_unet(5);
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let c = tiny_unet(6);
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|(pa, pc)| pa.value != pc.value);
        assert!(differs);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut net = tiny_unet(1);
        let x = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, y, x)| {
            ((y * 8 + x) as f64 * 0.173).sin()
        });
        let obj_w = Array4::from_shape_fn((1, 2, 8, 8), |(_, c, y, x)| {
            ((c * 64 + y * 8 + x) as f64 * 0.311).cos()
        });

        let (_, ctx) = net.forward_train(&x);
        net.zero_grad();
        let dx = net.backward(&obj_w, &ctx);

        let objective = |net: &UNet, input: &Array4<f64>| (&net.forward(input) * &obj_w).sum();

        // Input gradient at a few positions.
        let eps = 1e-6;
        let mut xp = x.clone();
        for &idx in &[0usize, 13, 37, 63] {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let up = objective(&net, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let down = objective(&net, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let num = (up - down) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() < 1e-5 * num.abs().max(1.0),
                "input grad {idx}: {ana} vs {num}"
            );
        }

        // A few weights from every parameter tensor.
        let n_params = net.params().len();
        for pi in 0..n_params {
            for probe in [0usize, 1] {
                let len = net.params()[pi].len();
                if probe >= len {
                    continue;
                }
                let ana = net.params()[pi].grad.as_slice().unwrap()[probe];
                let orig = net.params_mut()[pi].value.as_slice_mut().unwrap()[probe];
                net.params_mut()[pi].value.as_slice_mut().unwrap()[probe] = orig + eps;
                let up = objective(&net, &x);
                net.params_mut()[pi].value.as_slice_mut().unwrap()[probe] = orig - eps;
                let down = objective(&net, &x);
                net.params_mut()[pi].value.as_slice_mut().unwrap()[probe] = orig;
                let num = (up - down) / (2.0 * eps);
                assert!(
                    (num - ana).abs() < 1e-5 * num.abs().max(1.0),
                    "param {pi}[{probe}]: {ana} vs {num}"
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = tiny_unet(2);
        let x = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, y, x)| ((y + x) as f64 * 0.2).cos());
        let a = net.forward(&x);
        let b = net.forward(&x);
        assert_eq!(a, b);
    }
}
