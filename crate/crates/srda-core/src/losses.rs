//! Differentiable loss functions for source training and adaptation.
//!
//! All losses reduce by the mean over pixels of one image; batching averages
//! per-image values. The class-ratio KL term is computed per image, never
//! pooled across a batch. Every logarithm is floored at [`LOG_EPS`].
//!
//! The `*_with_grad` companions operate on raw logits and return the exact
//! analytic gradient with respect to those logits, which is what the training
//! loop consumes.

use ndarray::{Array1, Array3};

use crate::error::{Result, SrdaError};
use crate::types::{ClassRatio, LabelMask, LossValue, ProbMap, LOG_EPS};

fn ln_clamped(v: f64) -> f64 {
    v.max(LOG_EPS).ln()
}

fn check_same_shape(pred: &ProbMap, target: &LabelMask) -> Result<()> {
    let (h, w) = target.dim();
    if pred.height() != h || pred.width() != w {
        return Err(SrdaError::shape_mismatch(
            format!("({}, {})", pred.height(), pred.width()),
            format!("({h}, {w})"),
        ));
    }
    Ok(())
}

/// Mean over pixels of the cross-entropy between a one-hot target and the
/// predicted distribution.
pub fn cross_entropy(pred: &ProbMap, target: &LabelMask) -> Result<LossValue> {
    check_same_shape(pred, target)?;
    target.validate_classes(pred.classes())?;
    let mut total = 0.0;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let cls = target.values()[[y, x]] as usize;
            total -= ln_clamped(pred.values()[[cls, y, x]]);
        }
    }
    LossValue::new(total / pred.pixels() as f64)
}

/// Mean over pixels of the Shannon entropy of each per-pixel prediction.
/// Lies in `[0, ln K]`.
pub fn entropy_loss(pred: &ProbMap) -> Result<LossValue> {
    let mut total = 0.0;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            for c in 0..pred.classes() {
                let p = pred.values()[[c, y, x]];
                total -= p * ln_clamped(p);
            }
        }
    }
    LossValue::new(total / pred.pixels() as f64)
}

/// Soft class-ratio: the per-class spatial mean of the prediction.
pub fn predicted_ratio(pred: &ProbMap) -> Result<ClassRatio> {
    let n = pred.pixels() as f64;
    let mut values = Array1::<f64>::zeros(pred.classes());
    for c in 0..pred.classes() {
        let mut sum = 0.0;
        for y in 0..pred.height() {
            for x in 0..pred.width() {
                sum += pred.values()[[c, y, x]];
            }
        }
        // Means of per-pixel simplex vectors stay on the simplex, but float
        // accumulation can leave ulp-level dust outside [0,1].
        values[c] = (sum / n).clamp(0.0, 1.0);
    }
    ClassRatio::new(values)
}

/// `KL(prior ‖ predicted)` over class-ratio vectors. Zero prior entries
/// contribute nothing; predicted entries are clamped at [`LOG_EPS`].
pub fn kl_ratio(prior: &ClassRatio, predicted: &ClassRatio) -> Result<LossValue> {
    if prior.classes() != predicted.classes() {
        return Err(SrdaError::ClassMismatch {
            expected: prior.classes(),
            actual: predicted.classes(),
        });
    }
    let mut total = 0.0;
    for (p, q) in prior.values().iter().zip(predicted.values().iter()) {
        if *p > 0.0 {
            total += p * (p.ln() - ln_clamped(*q));
        }
    }
    LossValue::new(total)
}

/// The adaptation objective: prediction entropy plus `lambda` times the KL
/// between the prior ratio and the predicted soft ratio.
pub fn adaptation_loss(pred: &ProbMap, prior: &ClassRatio, lambda: f64) -> Result<LossValue> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(SrdaError::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let ent = entropy_loss(pred)?;
    let kl = kl_ratio(prior, &predicted_ratio(pred)?)?;
    LossValue::new(ent.value() + lambda * kl.value())
}

/// The benchmark adaptation objective that keeps source supervision: source
/// cross-entropy plus `lambda` times the target ratio-matching KL.
pub fn adasource_loss(
    source_pred: &ProbMap,
    source_target: &LabelMask,
    target_pred: &ProbMap,
    prior: &ClassRatio,
    lambda: f64,
) -> Result<LossValue> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(SrdaError::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let ce = cross_entropy(source_pred, source_target)?;
    let kl = kl_ratio(prior, &predicted_ratio(target_pred)?)?;
    LossValue::new(ce.value() + lambda * kl.value())
}

/// Loss terms of one adaptation step, with the KL already weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationParts {
    pub entropy: f64,
    /// `lambda * KL(prior ‖ predicted_ratio)`.
    pub weighted_kl: f64,
    pub total: f64,
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(
    logits: &Array3<f64>,
    target: &LabelMask,
) -> Result<(f64, Array3<f64>)> {
    let pred = ProbMap::from_logits(logits)?;
    let loss = cross_entropy(&pred, target)?;
    let (k, h, w) = logits.dim();
    let n = (h * w) as f64;
    let mut grad = pred.values().clone();
    for y in 0..h {
        for x in 0..w {
            let cls = target.values()[[y, x]] as usize;
            grad[[cls, y, x]] -= 1.0;
        }
    }
    grad.mapv_inplace(|g| g / n);
    debug_assert_eq!(grad.dim(), (k, h, w));
    Ok((loss.value(), grad))
}

/// Mean per-pixel entropy and its gradient with respect to the logits.
pub fn entropy_with_grad(logits: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    let pred = ProbMap::from_logits(logits)?;
    let (k, h, w) = logits.dim();
    let n = (h * w) as f64;
    let mut grad = Array3::<f64>::zeros((k, h, w));
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut pixel_entropy = 0.0;
            for c in 0..k {
                let p = pred.values()[[c, y, x]];
                pixel_entropy -= p * ln_clamped(p);
            }
            total += pixel_entropy;
            for c in 0..k {
                let p = pred.values()[[c, y, x]];
                grad[[c, y, x]] = -p * (ln_clamped(p) + pixel_entropy) / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// `KL(prior ‖ predicted_ratio(softmax(logits)))` and its gradient with
/// respect to the logits. The prior is a constant; no gradient flows
/// through it.
pub fn ratio_kl_with_grad(logits: &Array3<f64>, prior: &ClassRatio) -> Result<(f64, Array3<f64>)> {
    let pred = ProbMap::from_logits(logits)?;
    let ratio = predicted_ratio(&pred)?;
    let kl = kl_ratio(prior, &ratio)?;

    let (k, h, w) = logits.dim();
    let n = (h * w) as f64;
    // d KL / d ratio_c = -prior_c / ratio_c (zero where the clamp is active),
    // chained through d ratio / d logits.
    let mut ratio_sensitivity = Array1::<f64>::zeros(k);
    for c in 0..k {
        let q = ratio.values()[c];
        ratio_sensitivity[c] = if q > LOG_EPS {
            prior.values()[c] / q
        } else {
            0.0
        };
    }
    let mut grad = Array3::<f64>::zeros((k, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut weighted = 0.0;
            for c in 0..k {
                weighted += ratio_sensitivity[c] * pred.values()[[c, y, x]];
            }
            for c in 0..k {
                let p = pred.values()[[c, y, x]];
                grad[[c, y, x]] = p * (weighted - ratio_sensitivity[c]) / n;
            }
        }
    }
    Ok((kl.value(), grad))
}

/// Adaptation loss terms and gradient with respect to the logits.
///
/// The prior is treated as a constant: no gradient flows through it.
pub fn adaptation_with_grad(
    logits: &Array3<f64>,
    prior: &ClassRatio,
    lambda: f64,
) -> Result<(AdaptationParts, Array3<f64>)> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(SrdaError::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let (entropy, mut grad) = entropy_with_grad(logits)?;
    let (kl, kl_grad) = ratio_kl_with_grad(logits, prior)?;
    grad.zip_mut_with(&kl_grad, |g, &kg| *g += lambda * kg);

    let weighted_kl = lambda * kl;
    Ok((
        AdaptationParts {
            entropy,
            weighted_kl,
            total: entropy + weighted_kl,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-9;

    fn two_class_map(fg: &[f64], h: usize, w: usize) -> ProbMap {
        let mut values = Array3::<f64>::zeros((2, h, w));
        for (i, &p) in fg.iter().enumerate() {
            let (y, x) = (i / w, i % w);
            values[[0, y, x]] = 1.0 - p;
            values[[1, y, x]] = p;
        }
        ProbMap::new(values).unwrap()
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let target = LabelMask::new(array![[0, 1], [1, 0]]);
        let pred = ProbMap::from_mask(&target, 2).unwrap();
        let loss = cross_entropy(&pred, &target).unwrap();
        assert!(loss.value().abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_uniform_prediction_is_ln2() {
        let pred = two_class_map(&[0.5], 1, 1);
        let target = LabelMask::new(array![[1]]);
        let loss = cross_entropy(&pred, &target).unwrap();
        assert!((loss.value() - std::f64::consts::LN_2).abs() < TOL);
    }

    #[test]
    fn cross_entropy_two_pixel_hand_value() {
        // (-ln 0.9 - ln 0.8) / 2
        let pred = two_class_map(&[0.1, 0.8], 1, 2);
        let target = LabelMask::new(array![[0, 1]]);
        let loss = cross_entropy(&pred, &target).unwrap();
        assert!((loss.value() - 0.164_252_033_485_618_0).abs() < TOL);
    }

    #[test]
    fn cross_entropy_rejects_shape_mismatch() {
        let pred = two_class_map(&[0.5, 0.5], 1, 2);
        let target = LabelMask::new(Array2::zeros((2, 2)));
        assert!(matches!(
            cross_entropy(&pred, &target),
            Err(SrdaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_rejects_class_overflow() {
        let pred = two_class_map(&[0.5], 1, 1);
        let target = LabelMask::new(array![[2]]);
        assert!(matches!(
            cross_entropy(&pred, &target),
            Err(SrdaError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        let pred = two_class_map(&[0.0, 1.0, 1.0, 0.0], 2, 2);
        assert!(entropy_loss(&pred).unwrap().value().abs() < 1e-7);
    }

    #[test]
    fn entropy_of_uniform_is_ln_k() {
        let pred = ProbMap::uniform(2, 3, 3).unwrap();
        let loss = entropy_loss(&pred).unwrap();
        assert!((loss.value() - std::f64::consts::LN_2).abs() < TOL);
    }

    #[test]
    fn entropy_hand_value() {
        let pred = two_class_map(&[0.1], 1, 1);
        let loss = entropy_loss(&pred).unwrap();
        assert!((loss.value() - 0.325_082_973_391_448_2).abs() < TOL);
    }

    #[test]
    fn predicted_ratio_constant_map() {
        let pred = two_class_map(&[0.5; 4], 2, 2);
        let r = predicted_ratio(&pred).unwrap();
        assert!((r.values()[0] - 0.5).abs() < TOL);
        assert!((r.values()[1] - 0.5).abs() < TOL);
    }

    #[test]
    fn predicted_ratio_one_hot_background() {
        let pred = two_class_map(&[0.0; 4], 2, 2);
        let r = predicted_ratio(&pred).unwrap();
        assert_eq!(r.values()[0], 1.0);
        assert_eq!(r.values()[1], 0.0);
    }

    #[test]
    fn predicted_ratio_four_pixel_hand_value() {
        let pred = two_class_map(&[0.0, 0.0, 1.0, 0.5], 2, 2);
        let r = predicted_ratio(&pred).unwrap();
        assert!((r.values()[0] - 0.625).abs() < TOL);
        assert!((r.values()[1] - 0.375).abs() < TOL);
    }

    #[test]
    fn kl_of_identical_ratios_is_zero() {
        let r = ClassRatio::new(array![0.3, 0.7]).unwrap();
        assert_eq!(kl_ratio(&r, &r).unwrap().value(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        let one_hot = ClassRatio::new(array![1.0, 0.0]).unwrap();
        let uniform = ClassRatio::new(array![0.5, 0.5]).unwrap();
        let kl = kl_ratio(&one_hot, &uniform).unwrap();
        assert!((kl.value() - std::f64::consts::LN_2).abs() < TOL);

        let prior = ClassRatio::new(array![0.25, 0.75]).unwrap();
        let kl = kl_ratio(&prior, &uniform).unwrap();
        assert!((kl.value() - 0.130_812_035_946_784_7).abs() < TOL);
    }

    #[test]
    fn kl_rejects_class_mismatch() {
        let a = ClassRatio::new(array![0.5, 0.5]).unwrap();
        let b = ClassRatio::new(array![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            kl_ratio(&a, &b),
            Err(SrdaError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn adaptation_loss_zero_for_prior_matched_one_hot() {
        // 1 of 4 pixels foreground, prior (0.75, 0.25).
        let pred = two_class_map(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let prior = ClassRatio::new(array![0.75, 0.25]).unwrap();
        for lambda in [0.0, 0.01, 1.0, 100.0] {
            let loss = adaptation_loss(&pred, &prior, lambda).unwrap();
            assert!(loss.value().abs() < 1e-6, "lambda {lambda}");
        }
    }

    #[test]
    fn adaptation_loss_reduces_to_entropy_at_lambda_zero() {
        let pred = two_class_map(&[0.3, 0.8, 0.1, 0.6], 2, 2);
        let prior = ClassRatio::new(array![0.9, 0.1]).unwrap();
        let adapt = adaptation_loss(&pred, &prior, 0.0).unwrap();
        let ent = entropy_loss(&pred).unwrap();
        assert_eq!(adapt.value(), ent.value());
    }

    #[test]
    fn adaptation_loss_uniform_hand_value() {
        let pred = ProbMap::uniform(2, 4, 4).unwrap();
        let prior = ClassRatio::new(array![1.0, 0.0]).unwrap();
        let loss = adaptation_loss(&pred, &prior, 0.01).unwrap();
        // ln 2 + 0.01 * ln 2
        assert!((loss.value() - 1.01 * std::f64::consts::LN_2).abs() < TOL);
    }

    #[test]
    fn adaptation_loss_rejects_negative_lambda() {
        let pred = ProbMap::uniform(2, 2, 2).unwrap();
        let prior = ClassRatio::new(array![0.5, 0.5]).unwrap();
        assert!(matches!(
            adaptation_loss(&pred, &prior, -0.1),
            Err(SrdaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn adasource_loss_perfect_inputs() {
        let target = LabelMask::new(array![[0, 1], [0, 0]]);
        let source_pred = ProbMap::from_mask(&target, 2).unwrap();
        let target_pred = two_class_map(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let prior = ClassRatio::new(array![0.75, 0.25]).unwrap();
        let loss = adasource_loss(&source_pred, &target, &target_pred, &prior, 0.01).unwrap();
        assert!(loss.value().abs() < 1e-6);
    }

    #[test]
    fn adasource_reduces_to_cross_entropy_at_lambda_zero() {
        let target = LabelMask::new(array![[0, 1]]);
        let source_pred = two_class_map(&[0.1, 0.8], 1, 2);
        let target_pred = ProbMap::uniform(2, 2, 2).unwrap();
        let prior = ClassRatio::new(array![0.5, 0.5]).unwrap();
        let loss = adasource_loss(&source_pred, &target, &target_pred, &prior, 0.0).unwrap();
        let ce = cross_entropy(&source_pred, &target).unwrap();
        assert_eq!(loss.value(), ce.value());
    }

    #[test]
    fn adasource_uniform_hand_value() {
        let target = LabelMask::new(Array2::zeros((2, 2)));
        let source_pred = ProbMap::uniform(2, 2, 2).unwrap();
        let target_pred = ProbMap::uniform(2, 2, 2).unwrap();
        let prior = ClassRatio::new(array![1.0, 0.0]).unwrap();
        let loss = adasource_loss(&source_pred, &target, &target_pred, &prior, 0.01).unwrap();
        assert!((loss.value() - 1.01 * std::f64::consts::LN_2).abs() < TOL);
    }

    fn random_logits(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((k, h, w), |_| rng.random_range(-2.0..2.0))
    }

    /// Max relative error between analytic and central-difference gradients,
    /// normalized by the numeric gradient's scale.
    fn finite_diff_rel_err<F>(logits: &Array3<f64>, analytic: &Array3<f64>, f: F) -> f64
    where
        F: Fn(&Array3<f64>) -> f64,
    {
        let eps = 1e-6;
        let mut numeric = Array3::<f64>::zeros(logits.dim());
        let mut probe = logits.clone();
        for idx in 0..logits.len() {
            let slot = probe.as_slice_mut().unwrap();
            let orig = slot[idx];
            slot[idx] = orig + eps;
            let up = f(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig - eps;
            let down = f(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig;
            numeric.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * eps);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        analytic
            .iter()
            .zip(numeric.iter())
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
            / scale
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 2, 3, 3);
            let (_, grad) = entropy_with_grad(&logits).unwrap();
            let err = finite_diff_rel_err(&logits, &grad, |z| {
                entropy_with_grad(z).unwrap().0
            });
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = LabelMask::new(array![[0, 1, 0], [1, 1, 0], [0, 0, 1]]);
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 2, 3, 3);
            let (_, grad) = cross_entropy_with_grad(&logits, &target).unwrap();
            let err = finite_diff_rel_err(&logits, &grad, |z| {
                cross_entropy_with_grad(z, &target).unwrap().0
            });
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn ratio_kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let prior = ClassRatio::new(array![0.6, 0.4]).unwrap();
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 2, 3, 3);
            let (_, grad) = ratio_kl_with_grad(&logits, &prior).unwrap();
            let err = finite_diff_rel_err(&logits, &grad, |z| {
                ratio_kl_with_grad(z, &prior).unwrap().0
            });
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn adaptation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prior = ClassRatio::new(array![0.8, 0.2]).unwrap();
        for lambda in [0.0, 0.01, 0.5] {
            let logits = random_logits(&mut rng, 2, 3, 3);
            let (parts, grad) = adaptation_with_grad(&logits, &prior, lambda).unwrap();
            assert!((parts.total - (parts.entropy + parts.weighted_kl)).abs() < 1e-12);
            let err = finite_diff_rel_err(&logits, &grad, |z| {
                adaptation_with_grad(z, &prior, lambda).unwrap().0.total
            });
            assert!(err < 1e-6, "lambda {lambda}, relative error {err}");
        }
    }

    fn simplex_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1e-3..1.0f64, k).prop_map(|raw| {
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_ln_k(fg in proptest::collection::vec(0.0..=1.0f64, 9)) {
            let pred = two_class_map(&fg, 3, 3);
            let h = entropy_loss(&pred).unwrap().value();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= std::f64::consts::LN_2 + 1e-9);
        }

        #[test]
        fn predicted_ratio_is_simplex(fg in proptest::collection::vec(0.0..=1.0f64, 16)) {
            let pred = two_class_map(&fg, 4, 4);
            let r = predicted_ratio(&pred).unwrap();
            let sum: f64 = r.values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn kl_gibbs_inequality(a in simplex_strategy(3), b in simplex_strategy(3)) {
            let pa = ClassRatio::new(Array1::from_vec(a.clone())).unwrap();
            let pb = ClassRatio::new(Array1::from_vec(b.clone())).unwrap();
            let kl = kl_ratio(&pa, &pb).unwrap().value();
            prop_assert!(kl >= 0.0);
            let l1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            if l1 > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn adaptation_monotone_in_lambda(
            fg in proptest::collection::vec(0.01..=0.99f64, 9),
            prior_fg in 0.05..0.95f64,
            l1 in 0.0..1.0f64,
            l2 in 0.0..1.0f64,
        ) {
            let pred = two_class_map(&fg, 3, 3);
            let prior = ClassRatio::new(array![1.0 - prior_fg, prior_fg]).unwrap();
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let a = adaptation_loss(&pred, &prior, lo).unwrap().value();
            let b = adaptation_loss(&pred, &prior, hi).unwrap().value();
            prop_assert!(b + 1e-12 >= a);
        }

        #[test]
        fn losses_invariant_under_class_permutation(
            fg in proptest::collection::vec(0.01..=0.99f64, 9),
            prior_fg in 0.05..0.95f64,
            targets in proptest::collection::vec(0u8..2, 9),
        ) {
            let pred = two_class_map(&fg, 3, 3);
            let swapped: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
            let pred_swapped = two_class_map(&swapped, 3, 3);

            let mask = LabelMask::new(Array2::from_shape_vec((3, 3), targets.clone()).unwrap());
            let mask_swapped = LabelMask::new(
                Array2::from_shape_vec((3, 3), targets.iter().map(|t| 1 - t).collect()).unwrap(),
            );

            let ce = cross_entropy(&pred, &mask).unwrap().value();
            let ce_p = cross_entropy(&pred_swapped, &mask_swapped).unwrap().value();
            prop_assert!((ce - ce_p).abs() < 1e-9);

            let ent = entropy_loss(&pred).unwrap().value();
            let ent_p = entropy_loss(&pred_swapped).unwrap().value();
            prop_assert!((ent - ent_p).abs() < 1e-9);

            let prior = ClassRatio::new(array![1.0 - prior_fg, prior_fg]).unwrap();
            let prior_swapped = ClassRatio::new(array![prior_fg, 1.0 - prior_fg]).unwrap();
            let al = adaptation_loss(&pred, &prior, 0.05).unwrap().value();
            let al_p = adaptation_loss(&pred_swapped, &prior_swapped, 0.05).unwrap().value();
            prop_assert!((al - al_p).abs() < 1e-9);
        }
    }
}
