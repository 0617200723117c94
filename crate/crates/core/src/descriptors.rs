//! Fixed multi-scale descriptor bank standing in for a learned feature
//! pyramid: `[intensity, ∂x, ∂y]` at three scales, resampled to the volume
//! stride.

use crate::grid::FeatureGrid;
use crate::scalar::Real;
use crate::synth::GrayImage;

pub const LEVELS: usize = 3;
pub const CHANNELS: usize = 3 * LEVELS;

/// Separable tent blur with half-width `radius` (replicated border).
fn tent_blur(src: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    if radius <= 1 {
        return src.to_vec();
    }
    let r = radius as isize;
    let weights: Vec<f64> = (-r + 1..r).map(|k| (r - k.abs()) as f64).collect();
    let norm: f64 = weights.iter().sum();
    let pass = |data: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, wt) in weights.iter().enumerate() {
                    let k = t as isize - r + 1;
                    let (xx, yy) = if horizontal {
                        ((x as isize + k).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + k).clamp(0, h as isize - 1) as usize)
                    };
                    acc += wt * data[yy * w + xx];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Computes the 9-channel descriptor grid with cell `(i, j)` at pixel
/// `(j·stride, i·stride)`. Every level is evaluated at full resolution before
/// resampling so integer-pixel shifts of the image shift the descriptors
/// exactly.
pub fn describe<T: Real>(image: &GrayImage, stride: usize) -> FeatureGrid<T> {
    describe_levels(image, stride, LEVELS)
}

/// [`describe`] with an arbitrary number of levels; level `ℓ` uses spacing
/// `stride·2^ℓ`, so the first [`LEVELS`] levels coincide with [`describe`].
pub fn describe_levels<T: Real>(image: &GrayImage, stride: usize, levels: usize) -> FeatureGrid<T> {
    let (w, h) = (image.width, image.height);
    let gw = w / stride;
    let gh = h / stride;
    let src: Vec<f64> = image.data.iter().map(|v| *v as f64).collect();
    let mut out = FeatureGrid::zeros(3 * levels, gh, gw, stride);
    for level in 0..levels {
        let spacing = stride << level;
        let blurred = tent_blur(&src, w, h, spacing);
        let at = |x: isize, y: isize| {
            blurred[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
        };
        let sp = spacing as isize;
        for i in 0..gh {
            for j in 0..gw {
                let (x, y) = ((j * stride) as isize, (i * stride) as isize);
                let vals = [
                    at(x, y),
                    0.5 * (at(x + sp, y) - at(x - sp, y)),
                    0.5 * (at(x, y + sp) - at(x, y - sp)),
                ];
                for (c, v) in vals.into_iter().enumerate() {
                    let k = out.idx(3 * level + c, i, j);
                    out.data[k] = T::lit(v);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extra_levels_extend_the_base_bank() {
        let mut img = GrayImage::new(32, 24);
        for (k, v) in img.data.iter_mut().enumerate() {
            *v = ((k * 37) % 11) as f32 / 11.0;
        }
        let base: FeatureGrid<f64> = describe(&img, 2);
        let ext: FeatureGrid<f64> = describe_levels(&img, 2, 5);
        assert_eq!(ext.channels, 15);
        assert_eq!(&ext.data[..base.data.len()], &base.data[..]);
    }

    #[test]
    fn constant_image_has_zero_gradients() {
        let img = GrayImage {
            width: 16,
            height: 12,
            data: vec![0.4; 16 * 12],
        };
        let f: FeatureGrid<f64> = describe(&img, 2);
        assert_eq!((f.channels, f.height, f.width, f.stride_px), (9, 6, 8, 2));
        for level in 0..LEVELS {
            assert!(f.data[f.idx(3 * level, 0, 0)..][..48]
                .iter()
                .all(|v| (v - 0.4).abs() < 1e-6));
            for c in 1..3 {
                let k = f.idx(3 * level + c, 0, 0);
                assert!(f.data[k..k + 48].iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn horizontal_ramp_has_positive_x_gradient() {
        let (w, h) = (32, 8);
        let img = GrayImage {
            width: w,
            height: h,
            data: (0..w * h).map(|k| (k % w) as f32 / w as f32).collect(),
        };
        let f: FeatureGrid<f64> = describe(&img, 1);
        let mid = f.at(1, 4, 16);
        assert!(mid > 0.0);
        assert!(f.at(2, 4, 16).abs() < 1e-12);
    }

    #[test]
    fn shifted_images_give_shifted_descriptors() {
        // A pattern shifted by 4 px maps to a 2-cell shift at stride 2 in the interior.
        let (w, h) = (64, 16);
        let pat = |x: f64| 0.5 + 0.4 * (x * 0.37).sin();
        let a = GrayImage {
            width: w,
            height: h,
            data: (0..w * h).map(|k| pat((k % w) as f64) as f32).collect(),
        };
        let b = GrayImage {
            width: w,
            height: h,
            data: (0..w * h)
                .map(|k| pat((k % w) as f64 + 4.0) as f32)
                .collect(),
        };
        let fa: FeatureGrid<f64> = describe(&a, 2);
        let fb: FeatureGrid<f64> = describe(&b, 2);
        for c in 0..CHANNELS {
            for j in 10..18 {
                assert!(
                    (fb.at(c, 4, j) - fa.at(c, 4, j + 2)).abs() < 1e-5,
                    "c={c} j={j}"
                );
            }
        }
    }
}
