//! Class-ratio priors for adaptation.
//!
//! The true ratio of a labeled image is its per-class pixel fraction
//! ([`gt_ratio`]). For unlabeled target images an auxiliary convolutional
//! regressor, trained on source images against the true ratios with a
//! squared L2 loss, estimates the ratio by inference ([`estimate_prior`]).
//! A weak image-level tag overrides the estimate: images tagged as
//! containing no region of interest get the all-background ratio without
//! the regressor ever being consulted.

use std::path::Path;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::error::{Result, SrdaError};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, Conv2d, Linear,
    Param, ParamModel, SgdMomentum,
};
use crate::types::{ClassRatio, LabelMask};

pub const CHECKPOINT_KIND: &str = "ratio_regressor";

/// Image-level weak supervision: does the image contain the region of
/// interest at all?
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTag {
    pub has_foreground: bool,
}

/// Exact per-class pixel fractions of a hard mask.
pub fn gt_ratio(mask: &LabelMask, classes: usize) -> Result<ClassRatio> {
    let (h, w) = mask.dim();
    if h * w == 0 {
        return Err(SrdaError::InvalidArgument("empty mask".into()));
    }
    mask.validate_classes(classes)?;
    let mut counts = vec![0u64; classes];
    for &v in mask.values().iter() {
        counts[v as usize] += 1;
    }
    ClassRatio::from_counts(&counts)
}

/// Project a raw regressor output onto the simplex: clamp to [0, 1], then
/// renormalize by the sum. Degenerate all-zero outputs fall back to uniform.
pub fn project_ratio(raw: &Array1<f64>) -> Result<ClassRatio> {
    if raw.len() < 2 {
        return Err(SrdaError::InvalidArgument(format!(
            "ratio needs at least 2 entries, got {}",
            raw.len()
        )));
    }
    let clamped = raw.mapv(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
    let sum: f64 = clamped.sum();
    if sum <= 1e-12 {
        return ClassRatio::uniform(raw.len());
    }
    ClassRatio::new(clamped.mapv(|v| v / sum))
}

/// Anything that can predict a raw (pre-projection) ratio from an image.
pub trait RatioPredictor {
    fn classes(&self) -> usize;
    fn input_shape(&self) -> (usize, usize);
    fn predict_raw(&self, image: &Array2<f64>) -> Result<Array1<f64>>;
}

/// Estimated prior for one target image.
///
/// The tag override is absolute: for `has_foreground == false` the
/// predictor is never consulted and the prior is exactly (1, 0, ..., 0).
pub fn estimate_prior<P: RatioPredictor>(
    predictor: &P,
    image: &Array2<f64>,
    tag: ImageTag,
) -> Result<ClassRatio> {
    if !tag.has_foreground {
        return ClassRatio::all_background(predictor.classes());
    }
    if image.dim() != predictor.input_shape() {
        return Err(SrdaError::shape_mismatch(
            format!("{:?}", predictor.input_shape()),
            format!("{:?}", image.dim()),
        ));
    }
    let raw = predictor.predict_raw(image)?;
    project_ratio(&raw)
}

/// Compact convolutional regressor: three stride-2 conv stages, global
/// average pooling, and a linear head producing raw per-class scores.
pub struct RatioRegressor {
    convs: Vec<Conv2d>,
    head: Linear,
    pub classes: usize,
    pub input_shape: (usize, usize),
    pub seed: u64,
}

struct RegressorCtx {
    acts: Vec<Array4<f64>>,
    conv_ctx: Vec<crate::nn::ConvCtx>,
    pooled: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
}

const REG_WIDTHS: [usize; 3] = [24, 48, 96];

pub fn build_ratio_regressor(
    classes: usize,
    input_shape: (usize, usize),
    seed: u64,
) -> Result<RatioRegressor> {
    if classes < 2 {
        return Err(SrdaError::InvalidArgument(format!(
            "regressor needs at least 2 classes, got {classes}"
        )));
    }
    let (h, w) = input_shape;
    if h < 8 || w < 8 {
        return Err(SrdaError::InvalidArgument(format!(
            "input shape ({h},{w}) too small; need at least 8x8"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::new();
    let mut cin = 1;
    for &cout in REG_WIDTHS.iter() {
        convs.push(Conv2d::new(cin, cout, 3, 2, 1, &mut rng));
        cin = cout;
    }
    let head = Linear::new(cin, classes, &mut rng);
    Ok(RatioRegressor {
        convs,
        head,
        classes,
        input_shape,
        seed,
    })
}

impl RatioRegressor {
    fn forward_train(&self, batch: &Array4<f64>) -> (Array2<f64>, RegressorCtx) {
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut conv_ctx = Vec::with_capacity(self.convs.len());
        let in_dim = batch.dim();
        let mut cur = batch.clone();
        for conv in &self.convs {
            let (mut a, ctx) = conv.forward(&cur);
            leaky_relu(&mut a);
            conv_ctx.push(ctx);
            cur = a.clone();
            acts.push(a);
        }
        let pooled = global_avg_pool(&cur);
        let raw = self.head.forward(&pooled);
        (
            raw,
            RegressorCtx {
                acts,
                conv_ctx,
                pooled,
                in_dim,
            },
        )
    }

    fn backward(&mut self, draw: &Array2<f64>, ctx: &RegressorCtx) {
        let dpooled = self.head.backward(draw, &ctx.pooled);
        let last_dim = ctx.acts.last().unwrap().dim();
        let mut d = global_avg_pool_backward(&dpooled, last_dim);
        for l in (0..self.convs.len()).rev() {
            leaky_relu_backward(&mut d, &ctx.acts[l]);
            d = self.convs[l].backward(&d, &ctx.conv_ctx[l]);
            let _ = &d;
        }
        debug_assert_eq!(d.dim(), ctx.in_dim);
    }

    pub fn forward_batch(&self, batch: &Array4<f64>) -> Array2<f64> {
        self.forward_train(batch).0
    }
}

impl ParamModel for RatioRegressor {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

impl RatioPredictor for RatioRegressor {
    fn classes(&self) -> usize {
        self.classes
    }

    fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    fn predict_raw(&self, image: &Array2<f64>) -> Result<Array1<f64>> {
        let (h, w) = image.dim();
        let mut batch = Array4::<f64>::zeros((1, 1, h, w));
        batch
            .index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), 0)
            .assign(image);
        let raw = self.forward_batch(&batch);
        Ok(raw.index_axis(Axis(0), 0).to_owned())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegressorTrainConfig {
    pub classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        RegressorTrainConfig {
            classes: 2,
            epochs: 60,
            // Optimizer defaults follow the full-scale recipe; desk-scale
            // runs pass a larger rate explicitly.
            lr: 5e-6,
            momentum: 0.9,
            batch_size: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressorTrainRecord {
    /// Mean squared ratio error on the held-out split at initialization.
    pub initial_holdout_mse: f64,
    pub final_holdout_mse: f64,
    pub per_epoch_train_mse: Vec<f64>,
    pub holdout_len: usize,
}

fn mse_on(reg: &RatioRegressor, images: &[&Array2<f64>], targets: &[Array1<f64>]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (img, target) in images.iter().zip(targets.iter()) {
        let raw = reg.predict_raw(img).expect("shape checked");
        total += raw
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / images.len() as f64
}

/// Train the auxiliary regressor with SGD + momentum on the squared L2 loss
/// between raw outputs and true ratios. The last 10% of images (by index)
/// are held out for the before/after error comparison; with fewer than ten
/// images the whole set doubles as the holdout.
pub fn train_regressor(
    images: &[Array2<f64>],
    masks: &[LabelMask],
    cfg: &RegressorTrainConfig,
) -> Result<(RatioRegressor, RegressorTrainRecord)> {
    if images.is_empty() {
        return Err(SrdaError::InvalidArgument("empty training set".into()));
    }
    if images.len() != masks.len() {
        return Err(SrdaError::MissingInput(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(SrdaError::InvalidArgument("batch size must be positive".into()));
    }
    let shape = images[0].dim();
    for img in images {
        if img.dim() != shape {
            return Err(SrdaError::shape_mismatch(
                format!("{shape:?}"),
                format!("{:?}", img.dim()),
            ));
        }
    }

    let targets: Vec<Array1<f64>> = masks
        .iter()
        .map(|m| gt_ratio(m, cfg.classes).map(|r| r.values().clone()))
        .collect::<Result<_>>()?;

    let holdout_len = images.len() / 10;
    let train_len = images.len() - holdout_len;
    let (holdout_imgs, holdout_targets): (Vec<&Array2<f64>>, Vec<Array1<f64>>) = if holdout_len > 0
    {
        (
            images[train_len..].iter().collect(),
            targets[train_len..].to_vec(),
        )
    } else {
        (images.iter().collect(), targets.clone())
    };

    let mut reg = build_ratio_regressor(cfg.classes, shape, cfg.seed)?;
    let initial_holdout_mse = mse_on(&reg, &holdout_imgs, &holdout_targets);

    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_epoch_train_mse = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_len).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut batch = Array4::<f64>::zeros((b, 1, shape.0, shape.1));
            for (i, &idx) in chunk.iter().enumerate() {
                batch
                    .index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&images[idx]);
            }
            let (raw, ctx) = reg.forward_train(&batch);
            let mut draw = Array2::<f64>::zeros(raw.dim());
            let mut batch_loss = 0.0;
            for (i, &idx) in chunk.iter().enumerate() {
                for c in 0..cfg.classes {
                    let diff = raw[[i, c]] - targets[idx][c];
                    batch_loss += diff * diff;
                    draw[[i, c]] = 2.0 * diff / b as f64;
                }
            }
            reg.zero_grad();
            reg.backward(&draw, &ctx);
            let mut params = reg.params_mut();
            opt.step(&mut params);
            epoch_loss += batch_loss;
            count += b;
        }
        per_epoch_train_mse.push(if count > 0 {
            epoch_loss / count as f64
        } else {
            0.0
        });
    }

    let final_holdout_mse = mse_on(&reg, &holdout_imgs, &holdout_targets);
    Ok((
        reg,
        RegressorTrainRecord {
            initial_holdout_mse,
            final_holdout_mse,
            per_epoch_train_mse,
            holdout_len,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressorMeta {
    pub classes: usize,
    pub input_shape: [usize; 2],
    pub seed: u64,
    pub train_config: RegressorTrainConfig,
}

pub fn save_regressor(
    reg: &RatioRegressor,
    cfg: &RegressorTrainConfig,
    path: &Path,
) -> Result<()> {
    let meta = RegressorMeta {
        classes: reg.classes,
        input_shape: [reg.input_shape.0, reg.input_shape.1],
        seed: reg.seed,
        train_config: cfg.clone(),
    };
    let container = ckpt::Container {
        kind: CHECKPOINT_KIND.to_string(),
        meta: serde_json::to_value(&meta)?,
        params: reg.params().iter().map(|p| p.value.clone()).collect(),
        adam: None,
    };
    ckpt::save(path, &container)
}

pub fn load_regressor(path: &Path) -> Result<(RatioRegressor, RegressorMeta)> {
    let container = ckpt::load(path)?;
    if container.kind != CHECKPOINT_KIND {
        return Err(SrdaError::format(
            path,
            format!(
                "expected a '{CHECKPOINT_KIND}' checkpoint, found '{}'",
                container.kind
            ),
        ));
    }
    let meta: RegressorMeta = serde_json::from_value(container.meta.clone())?;
    let mut reg = build_ratio_regressor(
        meta.classes,
        (meta.input_shape[0], meta.input_shape[1]),
        meta.seed,
    )?;
    {
        let mut own = reg.params_mut();
        if own.len() != container.params.len() {
            return Err(SrdaError::format(path, "parameter list length mismatch"));
        }
        for (dst, src) in own.iter_mut().zip(container.params.iter()) {
            if dst.value.shape() != src.shape() {
                return Err(SrdaError::format(path, "parameter shape mismatch"));
            }
            dst.value.assign(src);
        }
    }
    Ok((reg, meta))
}
