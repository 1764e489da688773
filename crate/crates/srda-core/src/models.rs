//! The segmentation network: a compact U-shaped encoder-decoder producing
//! per-pixel class probabilities, with deterministic initialization and
//! checkpoint round-tripping.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::error::{Result, SrdaError};
use crate::nn::{Adam, AdamState, ParamModel, UNet};
use crate::types::ProbMap;

pub const CHECKPOINT_KIND: &str = "segmentation";

/// Network levels are fixed; width and class count vary per config.
pub const UNET_LEVELS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub classes: usize,
    pub width: usize,
    pub levels: usize,
    pub seed: u64,
}

pub struct SegModel {
    pub net: UNet,
    pub config: ModelConfig,
}

/// Deterministically initialized segmentation model. `width` is the channel
/// count of the first level; deeper levels double it.
pub fn build_seg_model(classes: usize, width: usize, seed: u64) -> Result<SegModel> {
    if classes < 2 {
        return Err(SrdaError::InvalidArgument(format!(
            "segmentation needs at least 2 classes, got {classes}"
        )));
    }
    if width == 0 {
        return Err(SrdaError::InvalidArgument("width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = UNet::new(1, classes, UNET_LEVELS, width, &mut rng);
    Ok(SegModel {
        net,
        config: ModelConfig {
            classes,
            width,
            levels: UNET_LEVELS,
            seed,
        },
    })
}

impl SegModel {
    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = self.net.spatial_divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(SrdaError::shape_mismatch(
                format!("spatial dims divisible by {div}"),
                format!("({h}, {w})"),
            ));
        }
        Ok(())
    }

    /// Segment one grayscale image.
    ///
    /// The forward pass has no stochastic layers, so inference is
    /// deterministic. Outputs shift along with whole-pixel translations of
    /// the input except near the zero-padded borders, where padding breaks
    /// exact equivariance.
    pub fn segment(&self, image: &Array2<f64>) -> Result<ProbMap> {
        let (h, w) = image.dim();
        self.check_input(h, w)?;
        let mut batch = Array4::<f64>::zeros((1, 1, h, w));
        batch.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), 0).assign(image);
        let logits = self.net.forward(&batch);
        let img_logits = logits.index_axis(Axis(0), 0).to_owned();
        ProbMap::from_logits(&img_logits)
    }

    /// Stack images into a batch tensor for the training loop.
    pub fn batch_from_images(&self, images: &[&Array2<f64>]) -> Result<Array4<f64>> {
        if images.is_empty() {
            return Err(SrdaError::InvalidArgument("empty batch".into()));
        }
        let (h, w) = images[0].dim();
        self.check_input(h, w)?;
        let mut batch = Array4::<f64>::zeros((images.len(), 1, h, w));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (h, w) {
                return Err(SrdaError::shape_mismatch(
                    format!("({h}, {w})"),
                    format!("{:?}", img.dim()),
                ));
            }
            batch
                .index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(*img);
        }
        Ok(batch)
    }

    pub fn snapshot_params(&self) -> Vec<ArrayD<f64>> {
        self.net.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_params(&mut self, params: &[ArrayD<f64>]) -> Result<()> {
        let mut own = self.net.params_mut();
        if own.len() != params.len() {
            return Err(SrdaError::Config(format!(
                "parameter count mismatch: model has {}, snapshot has {}",
                own.len(),
                params.len()
            )));
        }
        for (dst, src) in own.iter_mut().zip(params.iter()) {
            if dst.value.shape() != src.shape() {
                return Err(SrdaError::Config(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    dst.value.shape(),
                    src.shape()
                )));
            }
            dst.value.assign(src);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub config_hash: String,
    pub param_count: usize,
}

pub struct LoadedCheckpoint {
    pub model: SegModel,
    pub meta: CheckpointMeta,
    pub adam: Option<AdamState>,
}

impl LoadedCheckpoint {
    pub fn expect_classes(&self, classes: usize) -> Result<()> {
        if self.meta.model.classes != classes {
            return Err(SrdaError::Config(format!(
                "checkpoint was trained with {} classes, run expects {classes}",
                self.meta.model.classes
            )));
        }
        Ok(())
    }
}

/// Persist model parameters (and optionally the Adam moments) plus a JSON
/// sidecar describing the configuration.
pub fn save_checkpoint(
    model: &SegModel,
    epoch: usize,
    config_hash: &str,
    adam: Option<&Adam>,
    path: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        epoch,
        config_hash: config_hash.to_string(),
        param_count: model.param_count(),
    };
    let container = ckpt::Container {
        kind: CHECKPOINT_KIND.to_string(),
        meta: serde_json::to_value(&meta)?,
        params: model.snapshot_params(),
        adam: adam.map(|a| a.state()),
    };
    ckpt::save(path, &container)
}

/// Variant used when the trainer holds a raw parameter snapshot.
pub fn save_checkpoint_from_snapshot(
    config: &ModelConfig,
    params: Vec<ArrayD<f64>>,
    epoch: usize,
    config_hash: &str,
    adam: Option<AdamState>,
    path: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: config.clone(),
        epoch,
        config_hash: config_hash.to_string(),
        param_count: params.iter().map(|p| p.len()).sum(),
    };
    let container = ckpt::Container {
        kind: CHECKPOINT_KIND.to_string(),
        meta: serde_json::to_value(&meta)?,
        params,
        adam,
    };
    ckpt::save(path, &container)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
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
    let meta: CheckpointMeta = serde_json::from_value(container.meta.clone())?;
    if meta.model.levels != UNET_LEVELS {
        return Err(SrdaError::format(
            path,
            format!("unsupported level count {}", meta.model.levels),
        ));
    }
    let mut model = build_seg_model(meta.model.classes, meta.model.width, meta.model.seed)?;
    {
        let mut own = model.net.params_mut();
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
    Ok(LoadedCheckpoint {
        model,
        meta,
        adam: container.adam,
    })
}
