//! Core domain types shared across the toolkit.
//!
//! Probability maps, hard label masks and class-ratio vectors all validate
//! their invariants at construction, so downstream code can rely on them
//! without re-checking.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Result, SrdaError};

/// Tolerance for per-pixel (and per-vector) simplex sums.
pub const SIMPLEX_TOL: f64 = 1e-5;

/// Floor applied inside every logarithm; keeps losses finite on one-hot inputs.
pub const LOG_EPS: f64 = 1e-8;

/// Per-pixel K-class softmax output of a segmentation model, shape `(K, H, W)`.
///
/// Every entry lies in `[0, 1]` and each pixel's channel vector sums to 1
/// within [`SIMPLEX_TOL`]. The field is private: a `ProbMap` can only exist
/// in a valid state.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    values: Array3<f64>,
}

impl ProbMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (k, h, w) = values.dim();
        if k < 2 {
            return Err(SrdaError::InvalidArgument(format!(
                "probability map needs at least 2 classes, got {k}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(SrdaError::InvalidArgument(
                "probability map over an empty image".into(),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for c in 0..k {
                    let v = values[[c, y, x]];
                    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                        return Err(SrdaError::SimplexViolation(format!(
                            "entry {v} at (class {c}, pixel {y},{x}) outside [0,1]"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(SrdaError::SimplexViolation(format!(
                        "pixel ({y},{x}) channel sum {sum} deviates from 1"
                    )));
                }
            }
        }
        Ok(ProbMap { values })
    }

    /// Softmax over the class axis of raw logits; always yields a valid map.
    pub fn from_logits(logits: &Array3<f64>) -> Result<Self> {
        let (k, h, w) = logits.dim();
        if k < 2 || h == 0 || w == 0 {
            return Err(SrdaError::InvalidArgument(format!(
                "bad logits shape ({k},{h},{w})"
            )));
        }
        let mut values = Array3::<f64>::zeros((k, h, w));
        for y in 0..h {
            for x in 0..w {
                let mut max = f64::NEG_INFINITY;
                for c in 0..k {
                    max = max.max(logits[[c, y, x]]);
                }
                let mut sum = 0.0;
                for c in 0..k {
                    let e = (logits[[c, y, x]] - max).exp();
                    values[[c, y, x]] = e;
                    sum += e;
                }
                for c in 0..k {
                    values[[c, y, x]] /= sum;
                }
            }
        }
        Ok(ProbMap { values })
    }

    /// One-hot encoding of a hard mask; the boundary conversion used when a
    /// loss needs a soft map.
    pub fn from_mask(mask: &LabelMask, classes: usize) -> Result<Self> {
        mask.validate_classes(classes)?;
        let (h, w) = mask.dim();
        let mut values = Array3::<f64>::zeros((classes, h, w));
        for y in 0..h {
            for x in 0..w {
                values[[mask.values()[[y, x]] as usize, y, x]] = 1.0;
            }
        }
        ProbMap::new(values)
    }

    pub fn uniform(classes: usize, h: usize, w: usize) -> Result<Self> {
        if classes < 2 {
            return Err(SrdaError::InvalidArgument(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        ProbMap::new(Array3::from_elem((classes, h, w), 1.0 / classes as f64))
    }

    pub fn classes(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }
}

/// Per-pixel hard class assignment, shape `(H, W)`, entries in `{0..K-1}`.
///
/// The mask itself does not know `K`; call [`LabelMask::validate_classes`]
/// where a class count is in scope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    values: Array2<u8>,
}

impl LabelMask {
    pub fn new(values: Array2<u8>) -> Self {
        LabelMask { values }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn validate_classes(&self, classes: usize) -> Result<()> {
        if let Some(&max) = self.values.iter().max() {
            if (max as usize) >= classes {
                return Err(SrdaError::ClassMismatch {
                    expected: classes,
                    actual: max as usize + 1,
                });
            }
        }
        Ok(())
    }

    pub fn has_foreground(&self) -> bool {
        self.values.iter().any(|&v| v != 0)
    }

    /// Pixels assigned to `cls`.
    pub fn class_count(&self, cls: u8) -> usize {
        self.values.iter().filter(|&&v| v == cls).count()
    }
}

/// A length-K vector of region proportions on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRatio {
    values: Array1<f64>,
}

impl ClassRatio {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(SrdaError::InvalidArgument(format!(
                "class ratio needs at least 2 entries, got {}",
                values.len()
            )));
        }
        let mut sum = 0.0;
        for &v in values.iter() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(SrdaError::SimplexViolation(format!(
                    "ratio entry {v} outside [0,1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(SrdaError::SimplexViolation(format!(
                "ratio sum {sum} deviates from 1"
            )));
        }
        Ok(ClassRatio { values })
    }

    /// Ratio with all mass on class 0; the prior assigned to images tagged
    /// as containing no region of interest.
    pub fn all_background(classes: usize) -> Result<Self> {
        let mut values = Array1::zeros(classes);
        values[0] = 1.0;
        ClassRatio::new(values)
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        ClassRatio::new(Array1::from_elem(classes, 1.0 / classes as f64))
    }

    /// Exact per-class fractions from pixel counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(SrdaError::InvalidArgument(
                "ratio from an empty pixel set".into(),
            ));
        }
        let values = counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect::<Array1<f64>>();
        ClassRatio::new(values)
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    /// Total proportion of non-background classes.
    pub fn foreground(&self) -> f64 {
        self.values.iter().skip(1).sum()
    }
}

/// A finite, non-negative scalar loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue(f64);

impl LossValue {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(SrdaError::InvalidArgument(format!(
                "non-finite loss value {value}"
            )));
        }
        // Analytic losses are non-negative; only float dust can dip below zero.
        Ok(LossValue(value.max(0.0)))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}
