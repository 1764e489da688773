//! Evaluation metrics on hard masks plus per-pixel entropy maps.
//!
//! The Hausdorff distance runs on full foreground pixel sets (not extracted
//! boundaries) via an exact Euclidean distance transform, so it stays linear
//! in image size while matching the quadratic max-min definition exactly.

use ndarray::Array2;

use crate::error::{Result, SrdaError};
use crate::types::{LabelMask, ProbMap, LOG_EPS};

/// Per-pixel argmax of a probability map; ties break toward the lowest
/// class index.
pub fn argmax_mask(pred: &ProbMap) -> LabelMask {
    let (k, h, w) = (pred.classes(), pred.height(), pred.width());
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_p = pred.values()[[0, y, x]];
            for c in 1..k {
                let p = pred.values()[[c, y, x]];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            out[[y, x]] = best as u8;
        }
    }
    LabelMask::new(out)
}

fn check_shapes(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SrdaError::shape_mismatch(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

/// Dice similarity coefficient of the binary masks of `cls`.
/// Defined as 1.0 when both masks are empty.
pub fn dice(pred: &LabelMask, gt: &LabelMask, cls: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.values().iter().zip(gt.values().iter()) {
        let pa = p == cls;
        let gb = g == cls;
        a += pa as usize;
        b += gb as usize;
        inter += (pa && gb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

const DT_INF: f64 = 1e20;

/// 1D squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest `true` pixel.
/// Entries where the mask is empty end up at the large [`DT_INF`] sentinel.
fn edt_squared(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut grid = Array2::<f64>::from_elem((h, w), DT_INF);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                grid[[y, x]] = 0.0;
            }
        }
    }
    let mut scratch_f = vec![0.0f64; h.max(w)];
    let mut scratch_d = vec![0.0f64; h.max(w)];
    let mut scratch_v = vec![0usize; h.max(w)];
    let mut scratch_z = vec![0.0f64; h.max(w) + 1];

    // Along rows, then along columns.
    for y in 0..h {
        for x in 0..w {
            scratch_f[x] = grid[[y, x]];
        }
        dt_1d(
            &scratch_f[..w],
            &mut scratch_d[..w],
            &mut scratch_v[..w],
            &mut scratch_z[..w + 1],
        );
        for x in 0..w {
            grid[[y, x]] = scratch_d[x];
        }
    }
    for x in 0..w {
        for y in 0..h {
            scratch_f[y] = grid[[y, x]];
        }
        dt_1d(
            &scratch_f[..h],
            &mut scratch_d[..h],
            &mut scratch_v[..h],
            &mut scratch_z[..h + 1],
        );
        for y in 0..h {
            grid[[y, x]] = scratch_d[y];
        }
    }
    grid
}

/// Symmetric Hausdorff distance (in pixels) between the `cls` pixel sets of
/// two masks under Euclidean distance.
///
/// Both sets empty yields 0; exactly one empty yields the image diagonal
/// `sqrt(H^2 + W^2)` as a documented sentinel that dominates any achievable
/// pixel distance.
pub fn hausdorff(pred: &LabelMask, gt: &LabelMask, cls: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (h, w) = pred.dim();
    let a = pred.values().mapv(|v| v == cls);
    let b = gt.values().mapv(|v| v == cls);
    let a_empty = !a.iter().any(|&v| v);
    let b_empty = !b.iter().any(|&v| v);
    if a_empty && b_empty {
        return Ok(0.0);
    }
    if a_empty || b_empty {
        return Ok(((h * h + w * w) as f64).sqrt());
    }

    let dist_to_b = edt_squared(&b);
    let dist_to_a = edt_squared(&a);
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if a[[y, x]] {
                worst = worst.max(dist_to_b[[y, x]]);
            }
            if b[[y, x]] {
                worst = worst.max(dist_to_a[[y, x]]);
            }
        }
    }
    Ok(worst.sqrt())
}

/// Per-pixel prediction entropy, each value in `[0, ln K]`.
pub fn entropy_map(pred: &ProbMap) -> Array2<f64> {
    let (k, h, w) = (pred.classes(), pred.height(), pred.width());
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut e = 0.0;
            for c in 0..k {
                let p = pred.values()[[c, y, x]];
                e -= p * p.max(LOG_EPS).ln();
            }
            out[[y, x]] = e;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::entropy_loss;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(points: &[(usize, usize)], h: usize, w: usize) -> LabelMask {
        let mut m = Array2::<u8>::zeros((h, w));
        for &(y, x) in points {
            m[[y, x]] = 1;
        }
        LabelMask::new(m)
    }

    /// Quadratic max-min reference, independent of the distance-transform path.
    fn hausdorff_brute_force(pred: &LabelMask, gt: &LabelMask, cls: u8) -> f64 {
        let collect = |m: &LabelMask| -> Vec<(i64, i64)> {
            let mut out = Vec::new();
            for ((y, x), &v) in m.values().indexed_iter() {
                if v == cls {
                    out.push((y as i64, x as i64));
                }
            }
            out
        };
        let a = collect(pred);
        let b = collect(gt);
        let (h, w) = pred.dim();
        if a.is_empty() && b.is_empty() {
            return 0.0;
        }
        if a.is_empty() || b.is_empty() {
            return ((h * h + w * w) as f64).sqrt();
        }
        let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> i64 {
            from.iter()
                .map(|&(ay, ax)| {
                    to.iter()
                        .map(|&(by, bx)| (ay - by).pow(2) + (ax - bx).pow(2))
                        .min()
                        .unwrap()
                })
                .max()
                .unwrap()
        };
        (directed(&a, &b).max(directed(&b, &a)) as f64).sqrt()
    }

    #[test]
    fn argmax_of_one_hot_recovers_mask() {
        let mask = mask_from(&[(0, 1), (1, 0)], 2, 2);
        let p = ProbMap::from_mask(&mask, 2).unwrap();
        assert_eq!(argmax_mask(&p), mask);
    }

    #[test]
    fn argmax_uniform_breaks_ties_low() {
        let p = ProbMap::uniform(3, 2, 2).unwrap();
        let m = argmax_mask(&p);
        assert!(m.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn argmax_prefers_larger_probability() {
        let v = array![[[0.4]], [[0.6]]];
        let p = ProbMap::new(v).unwrap();
        assert_eq!(argmax_mask(&p).values()[[0, 0]], 1);
    }

    #[test]
    fn dice_identical_masks() {
        let m = mask_from(&[(1, 1), (1, 2), (2, 2)], 4, 4);
        assert_eq!(dice(&m, &m, 1).unwrap(), 1.0);
    }

    #[test]
    fn dice_disjoint_masks() {
        let a = mask_from(&[(0, 0)], 4, 4);
        let b = mask_from(&[(3, 3)], 4, 4);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        let a = mask_from(&[(0, 0), (0, 1), (0, 2), (0, 3)], 4, 4);
        let b = mask_from(&[(0, 2), (0, 3), (1, 0), (1, 1)], 4, 4);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_both_empty_is_one() {
        let a = mask_from(&[], 4, 4);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let a = mask_from(&[], 4, 4);
        let b = mask_from(&[], 3, 4);
        assert!(matches!(
            dice(&a, &b, 1),
            Err(SrdaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn hausdorff_identical_masks_is_zero() {
        let m = mask_from(&[(1, 1), (2, 3)], 5, 5);
        assert_eq!(hausdorff(&m, &m, 1).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_three_four_five() {
        let a = mask_from(&[(0, 0)], 8, 8);
        let b = mask_from(&[(3, 4)], 8, 8);
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), 5.0);
    }

    #[test]
    fn hausdorff_empty_cases() {
        let empty = mask_from(&[], 6, 8);
        let single = mask_from(&[(2, 2)], 6, 8);
        assert_eq!(hausdorff(&empty, &empty, 1).unwrap(), 0.0);
        let diag = ((6 * 6 + 8 * 8) as f64).sqrt();
        assert_eq!(hausdorff(&empty, &single, 1).unwrap(), diag);
        assert_eq!(hausdorff(&single, &empty, 1).unwrap(), diag);
    }

    #[test]
    fn hausdorff_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let density = rng.random_range(0.02..0.3);
            let a = LabelMask::new(Array2::from_shape_fn((16, 16), |_| {
                (rng.random::<f64>() < density) as u8
            }));
            let b = LabelMask::new(Array2::from_shape_fn((16, 16), |_| {
                (rng.random::<f64>() < density) as u8
            }));
            let fast = hausdorff(&a, &b, 1).unwrap();
            let slow = hausdorff_brute_force(&a, &b, 1);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn entropy_map_bounds_and_mean() {
        let logits = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| {
            ((c + 2 * y + x) as f64 * 0.37).sin()
        });
        let p = ProbMap::from_logits(&logits).unwrap();
        let map = entropy_map(&p);
        for &v in map.iter() {
            assert!((0.0..=std::f64::consts::LN_2 + 1e-9).contains(&v));
        }
        let mean = map.mean().unwrap();
        assert!((mean - entropy_loss(&p).unwrap().value()).abs() < 1e-6);
    }

    #[test]
    fn entropy_map_one_hot_is_zero() {
        let mask = mask_from(&[(0, 0)], 2, 2);
        let p = ProbMap::from_mask(&mask, 2).unwrap();
        assert!(entropy_map(&p).iter().all(|&v| v.abs() < 1e-7));
    }

    proptest! {
        #[test]
        fn dice_and_hausdorff_symmetric(
            a_pts in proptest::collection::vec((0usize..10, 0usize..10), 0..12),
            b_pts in proptest::collection::vec((0usize..10, 0usize..10), 0..12),
        ) {
            let a = mask_from(&a_pts, 10, 10);
            let b = mask_from(&b_pts, 10, 10);
            prop_assert_eq!(dice(&a, &b, 1).unwrap(), dice(&b, &a, 1).unwrap());
            prop_assert_eq!(hausdorff(&a, &b, 1).unwrap(), hausdorff(&b, &a, 1).unwrap());
            let d = dice(&a, &b, 1).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(hausdorff(&a, &b, 1).unwrap() >= 0.0);
        }
    }
}
