use crate::grid::{DisparityMap, PixelMap};
use crate::scalar::Real;

/// Probability clamp for [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy `−[y·ln p + (1−y)·ln(1−p)]` with `p` clamped to
/// `[ε, 1−ε]`.
pub fn bce_loss<T: Real>(pred: &[T], label: &[bool]) -> T {
    assert_eq!(pred.len(), label.len(), "pred/label length mismatch");
    if pred.is_empty() {
        return T::zero();
    }
    let eps = T::lit(BCE_EPS);
    let sum: T = pred
        .iter()
        .zip(label)
        .map(|(p, y)| {
            let p = p.max(eps).min(T::one() - eps);
            if *y {
                -p.ln()
            } else {
                -(T::one() - p).ln()
            }
        })
        .sum();
    sum / T::from_usize_lossy(pred.len())
}

/// Binary cross-entropy on a logit, stable for any finite `z`.
#[inline]
pub fn bce_with_logits<T: Real>(z: T, label: bool) -> T {
    let y = if label { T::one() } else { T::zero() };
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn smooth_l1<T: Real>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::lit(0.5) * x * x
    } else {
        a - T::lit(0.5)
    }
}

#[inline]
pub fn smooth_l1_grad<T: Real>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// Per-scale weights `λ_ω`; scale `ω` pools by `2^(ω−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(pub Vec<f64>);

impl Default for LossWeights {
    fn default() -> Self {
        Self(vec![1.0, 1.0, 1.0, 2.0 / 3.0, 1.0 / 3.0])
    }
}

/// Average pooling by `factor` over valid pixels; a pooled cell is valid
/// when at least one contributing pixel is.
pub fn pool_valid<T: Real>(map: &PixelMap<T>, factor: usize) -> PixelMap<T> {
    if factor <= 1 {
        return map.clone();
    }
    let w = map.width.div_ceil(factor);
    let h = map.height.div_ceil(factor);
    let mut values = vec![T::zero(); w * h];
    let mut valid = vec![false; w * h];
    for i in 0..h {
        for j in 0..w {
            let mut acc = T::zero();
            let mut n = 0usize;
            for y in i * factor..((i + 1) * factor).min(map.height) {
                for x in j * factor..((j + 1) * factor).min(map.width) {
                    let k = map.idx(x, y);
                    if map.valid[k] {
                        acc = acc + map.values[k];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                values[i * w + j] = acc / T::from_usize_lossy(n);
                valid[i * w + j] = true;
            }
        }
    }
    PixelMap {
        width: w,
        height: h,
        values,
        valid,
    }
}

/// `levels` maps pooled by `1, 2, 4, …`.
pub fn disparity_pyramid<T: Real>(map: &DisparityMap<T>, levels: usize) -> Vec<DisparityMap<T>> {
    (0..levels).map(|l| pool_valid(map, 1 << l)).collect()
}

/// `Σ_ω λ_ω · mean_p smooth_l1(pred_ω(p) − gt_ω(p))`, where entry `ω` of
/// `pred_pyramid` is pooled by `2^ω` and `gt` is pooled to match. The mean
/// runs over pixels valid in both maps; a scale with no valid pixels
/// contributes nothing.
pub fn disparity_loss<T: Real>(
    pred_pyramid: &[DisparityMap<T>],
    gt: &DisparityMap<T>,
    weights: &LossWeights,
) -> T {
    let mut total = T::zero();
    for (l, (pred, lambda)) in pred_pyramid.iter().zip(&weights.0).enumerate() {
        let g = pool_valid(gt, 1 << l);
        let mut acc = T::zero();
        let mut n = 0usize;
        for k in 0..pred.values.len().min(g.values.len()) {
            if pred.valid[k] && g.valid[k] {
                acc = acc + smooth_l1(pred.values[k] - g.values[k]);
                n += 1;
            }
        }
        if n > 0 {
            total = total + T::lit(*lambda) * acc / T::from_usize_lossy(n);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(&[0.5f64], &[true]) - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((bce_loss(&[0.9f64], &[false]) - 2.302585).abs() < 1e-6);
        assert!(bce_loss(&[1.0f64, 0.0], &[true, false]) < 1e-6);
        assert!(bce_loss(&[0.0f64], &[true]).is_finite());
    }

    #[test]
    fn logit_form_agrees_and_is_stable() {
        for z in [-100.0f64, -20.0, -1.0, 0.0, 0.3, 5.0, 100.0] {
            for y in [false, true] {
                let l = bce_with_logits(z, y);
                assert!(l.is_finite());
                if z.abs() < 15.0 {
                    assert!((l - bce_loss(&[sigmoid(z)], &[y])).abs() < 1e-9);
                }
            }
        }
        assert!(bce_with_logits(-100.0f32, true).is_finite());
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0f64), 0.0);
        assert_eq!(smooth_l1(0.5f64), 0.125);
        assert_eq!(smooth_l1(2.0f64), 1.5);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
    }

    fn map(w: usize, h: usize, v: f64) -> PixelMap<f64> {
        PixelMap::filled(w, h, v)
    }

    #[test]
    fn disparity_loss_examples() {
        let gt = map(8, 8, 10.0);
        let pyr = disparity_pyramid(&gt, 5);
        assert_eq!(disparity_loss(&pyr, &gt, &LossWeights::default()), 0.0);

        let pred = disparity_pyramid(&map(8, 8, 10.5), 1);
        let one = LossWeights(vec![1.0]);
        assert!((disparity_loss(&pred, &gt, &one) - 0.125).abs() < 1e-12);
        let two = LossWeights(vec![2.0]);
        assert!((disparity_loss(&pred, &gt, &two) - 0.25).abs() < 1e-12);

        let mut empty = gt.clone();
        empty.valid.iter_mut().for_each(|v| *v = false);
        assert_eq!(disparity_loss(&pred, &empty, &one), 0.0);
    }

    #[test]
    fn pooling_ignores_invalid_pixels() {
        let mut m = map(4, 2, 1.0);
        m.values[1] = 100.0;
        m.valid[1] = false;
        let p = pool_valid(&m, 2);
        assert_eq!((p.width, p.height), (2, 1));
        assert_eq!(p.values[0], 1.0);
    }
}
